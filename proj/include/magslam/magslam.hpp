#pragma once

// Umbrella header for the magslam library.

#include "magslam/config.hpp"
#include "magslam/csv.hpp"
#include "magslam/gpr.hpp"
#include "magslam/kernels.hpp"
#include "magslam/plot.hpp"
#include "magslam/rng.hpp"
#include "magslam/simulator.hpp"
#include "magslam/slam.hpp"
#include "magslam/strapdown.hpp"
#include "magslam/study.hpp"
#include "magslam/types.hpp"
