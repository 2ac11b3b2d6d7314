// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "coqmoe/numerics.hpp"
#include "coqmoe/model.hpp"
#include "coqmoe/synthetic.hpp"
#include "coqmoe/quant.hpp"
#include "coqmoe/reparam.hpp"
#include "coqmoe/logquant.hpp"
#include "coqmoe/qinfer.hpp"
#include "coqmoe/accelsim.hpp"
#include "coqmoe/archive.hpp"
#include "coqmoe/model_io.hpp"
#include "coqmoe/commands.hpp"
