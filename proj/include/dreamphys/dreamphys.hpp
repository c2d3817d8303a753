#pragma once

#include "dreamphys/config.hpp"
#include "dreamphys/error.hpp"
#include "dreamphys/field.hpp"
#include "dreamphys/gradcheck.hpp"
#include "dreamphys/guidance.hpp"
#include "dreamphys/image_io.hpp"
#include "dreamphys/math.hpp"
#include "dreamphys/mpm.hpp"
#include "dreamphys/optimizer.hpp"
#include "dreamphys/parallel.hpp"
#include "dreamphys/protocol.hpp"
#include "dreamphys/render.hpp"
#include "dreamphys/scenarios.hpp"
#include "dreamphys/scene.hpp"
