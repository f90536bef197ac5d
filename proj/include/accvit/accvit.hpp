#pragma once

// Umbrella header.

#include "accvit/attention.hpp"
#include "accvit/audit.hpp"
#include "accvit/conv_blocks.hpp"
#include "accvit/cost.hpp"
#include "accvit/error.hpp"
#include "accvit/gating.hpp"
#include "accvit/gradcheck.hpp"
#include "accvit/image.hpp"
#include "accvit/model.hpp"
#include "accvit/ops.hpp"
#include "accvit/params.hpp"
#include "accvit/partition.hpp"
#include "accvit/serialize.hpp"
#include "accvit/tensor.hpp"
#include "accvit/train.hpp"
#include "accvit/verify.hpp"
