#pragma once

#include "nodetl/adjoint.hpp"
#include "nodetl/data.hpp"
#include "nodetl/dynamics.hpp"
#include "nodetl/model.hpp"
#include "nodetl/solvers.hpp"
#include "nodetl/tensor.hpp"
#include "nodetl/train.hpp"

namespace nodetl {
inline constexpr const char* kVersion = "0.1.0";
}
