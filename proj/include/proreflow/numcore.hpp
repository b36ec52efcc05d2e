#pragma once

#include "proreflow/numcore/adam.hpp"
#include "proreflow/numcore/checkpoint.hpp"
#include "proreflow/numcore/mlp.hpp"
#include "proreflow/numcore/random.hpp"
#include "proreflow/numcore/tensor.hpp"
