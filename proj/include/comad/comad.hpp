#pragma once

#include "comad/adapter.hpp"
#include "comad/checkpoint.hpp"
#include "comad/config.hpp"
#include "comad/dataset.hpp"
#include "comad/distill.hpp"
#include "comad/errors.hpp"
#include "comad/gating.hpp"
#include "comad/gemm.hpp"
#include "comad/grad_check.hpp"
#include "comad/inspect.hpp"
#include "comad/io.hpp"
#include "comad/masking.hpp"
#include "comad/model.hpp"
#include "comad/ops.hpp"
#include "comad/optim.hpp"
#include "comad/pretrain.hpp"
#include "comad/probe.hpp"
#include "comad/rng.hpp"
#include "comad/tape.hpp"
#include "comad/tensor.hpp"
#include "comad/trainer.hpp"
#include "comad/verify.hpp"
#include "comad/vit.hpp"
