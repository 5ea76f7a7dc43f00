#include <catch2/catch_amalgamated.hpp>
#include "magslam/magslam.hpp"
