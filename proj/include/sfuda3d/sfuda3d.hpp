#pragma once

// Umbrella header.

#include "adapt.hpp"      // IWYU pragma: export
#include "common.hpp"     // IWYU pragma: export
#include "config.hpp"     // IWYU pragma: export
#include "eval.hpp"       // IWYU pragma: export
#include "gmm.hpp"        // IWYU pragma: export
#include "model.hpp"      // IWYU pragma: export
#include "phantom.hpp"    // IWYU pragma: export
#include "pipeline.hpp"   // IWYU pragma: export
#include "preprocess.hpp" // IWYU pragma: export
#include "swd.hpp"        // IWYU pragma: export
#include "tensor.hpp"     // IWYU pragma: export
#include "volume.hpp"     // IWYU pragma: export
