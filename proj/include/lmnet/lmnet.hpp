#pragma once

#include "lmnet/attention.hpp"
#include "lmnet/autodiff.hpp"
#include "lmnet/cost.hpp"
#include "lmnet/data.hpp"
#include "lmnet/errors.hpp"
#include "lmnet/fusion.hpp"
#include "lmnet/grad_check.hpp"
#include "lmnet/grad_suite.hpp"
#include "lmnet/image_io.hpp"
#include "lmnet/loss.hpp"
#include "lmnet/metrics.hpp"
#include "lmnet/model.hpp"
#include "lmnet/nn_ops.hpp"
#include "lmnet/reparam.hpp"
#include "lmnet/serialize.hpp"
#include "lmnet/tensor.hpp"
#include "lmnet/train.hpp"
