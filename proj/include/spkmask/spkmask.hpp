#pragma once

#include "spkmask/autograd.hpp"
#include "spkmask/config.hpp"
#include "spkmask/decode.hpp"
#include "spkmask/error.hpp"
#include "spkmask/io.hpp"
#include "spkmask/labels.hpp"
#include "spkmask/metrics.hpp"
#include "spkmask/model.hpp"
#include "spkmask/rng.hpp"
#include "spkmask/signal.hpp"
#include "spkmask/simulate.hpp"
#include "spkmask/train.hpp"
