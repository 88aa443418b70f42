#pragma once

#include "fsmdet/common.hpp"
#include "fsmdet/geometry.hpp"
#include "fsmdet/mesh.hpp"
#include "fsmdet/voxel.hpp"
#include "fsmdet/simlidar.hpp"
#include "fsmdet/vpgt.hpp"
#include "fsmdet/nn.hpp"
#include "fsmdet/fusion.hpp"
#include "fsmdet/srlayer.hpp"
#include "fsmdet/sdlayer.hpp"
#include "fsmdet/loss.hpp"
#include "fsmdet/io.hpp"
#include "fsmdet/harness.hpp"
