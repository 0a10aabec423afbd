#pragma once

#include "xmic/adapters.hpp"
#include "xmic/checkpoint.hpp"
#include "xmic/common.hpp"
#include "xmic/datastore.hpp"
#include "xmic/eval.hpp"
#include "xmic/gradcheck.hpp"
#include "xmic/nn.hpp"
#include "xmic/rng.hpp"
#include "xmic/synthetic.hpp"
#include "xmic/tensor.hpp"
#include "xmic/text_encoder.hpp"
#include "xmic/threads.hpp"
#include "xmic/training.hpp"
