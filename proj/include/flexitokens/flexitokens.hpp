#pragma once

// convenience include for the whole library

#include "flexitokens/autograd.hpp"
#include "flexitokens/boundary.hpp"
#include "flexitokens/bpe.hpp"
#include "flexitokens/calibration.hpp"
#include "flexitokens/checkpoint.hpp"
#include "flexitokens/common.hpp"
#include "flexitokens/data.hpp"
#include "flexitokens/hourglass.hpp"
#include "flexitokens/metrics.hpp"
#include "flexitokens/objectives.hpp"
#include "flexitokens/synthetic.hpp"
#include "flexitokens/train.hpp"
