#pragma once

// Umbrella header for the whole library.

#include "vag/config.hpp"
#include "vag/data.hpp"
#include "vag/embedder.hpp"
#include "vag/error.hpp"
#include "vag/harness.hpp"
#include "vag/label_pool.hpp"
#include "vag/metrics.hpp"
#include "vag/model.hpp"
#include "vag/objective.hpp"
#include "vag/optimizer.hpp"
#include "vag/pseudo_replay.hpp"
#include "vag/report.hpp"
#include "vag/rng.hpp"
#include "vag/tensor.hpp"
#include "vag/vocab.hpp"
