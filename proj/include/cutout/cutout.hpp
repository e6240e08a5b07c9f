#pragma once

// Umbrella header.
#include "cutout/analysis.hpp"
#include "cutout/augment.hpp"
#include "cutout/datasets.hpp"
#include "cutout/error.hpp"
#include "cutout/gridsearch.hpp"
#include "cutout/pipeline.hpp"
#include "cutout/rng.hpp"
#include "cutout/runtime.hpp"
#include "cutout/smallnet.hpp"
#include "cutout/synthetic.hpp"
#include "cutout/tensor.hpp"
