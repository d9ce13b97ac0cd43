#pragma once

// Umbrella header: the full library.

#include "dic3d/cloud.hpp"
#include "dic3d/correlation.hpp"
#include "dic3d/error.hpp"
#include "dic3d/fields.hpp"
#include "dic3d/harness.hpp"
#include "dic3d/imaging.hpp"
#include "dic3d/pipeline.hpp"
#include "dic3d/stereo.hpp"
