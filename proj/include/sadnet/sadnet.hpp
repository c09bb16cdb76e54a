#pragma once

#include "sadnet/accounting.hpp"
#include "sadnet/adam.hpp"
#include "sadnet/checkpoint.hpp"
#include "sadnet/config.hpp"
#include "sadnet/data.hpp"
#include "sadnet/deform_conv.hpp"
#include "sadnet/error.hpp"
#include "sadnet/gradcheck.hpp"
#include "sadnet/image.hpp"
#include "sadnet/metrics.hpp"
#include "sadnet/model.hpp"
#include "sadnet/ops.hpp"
#include "sadnet/params.hpp"
#include "sadnet/rng.hpp"
#include "sadnet/tape.hpp"
#include "sadnet/tensor.hpp"
#include "sadnet/trainer.hpp"
