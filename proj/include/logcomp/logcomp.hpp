#pragma once

#include "logcomp/checkpoint.hpp"
#include "logcomp/compressor.hpp"
#include "logcomp/config.hpp"
#include "logcomp/data.hpp"
#include "logcomp/error.hpp"
#include "logcomp/evaluator.hpp"
#include "logcomp/experiments.hpp"
#include "logcomp/filterbank.hpp"
#include "logcomp/matrix.hpp"
#include "logcomp/model.hpp"
#include "logcomp/random.hpp"
#include "logcomp/tensor.hpp"
#include "logcomp/trainer.hpp"
