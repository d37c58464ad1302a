#pragma once

// Umbrella header for the whole library.

#include "image.hpp"
#include "parallel.hpp"
#include "imagecore.hpp"
#include "io.hpp"
#include "state.hpp"
#include "operators.hpp"
#include "energy.hpp"
#include "solvers.hpp"
#include "pipeline.hpp"
#include "dataset.hpp"
#include "version.hpp"
