#pragma once

#include "ssmctr/tensor.hpp"
#include "ssmctr/trace.hpp"
#include "ssmctr/ops.hpp"
#include "ssmctr/random.hpp"
#include "ssmctr/features.hpp"
#include "ssmctr/datasets.hpp"
#include "ssmctr/ssm.hpp"
#include "ssmctr/models.hpp"
#include "ssmctr/optim.hpp"
#include "ssmctr/metrics.hpp"
#include "ssmctr/train.hpp"
#include "ssmctr/config.hpp"
#include "ssmctr/checkpoint.hpp"
