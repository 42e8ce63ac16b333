#pragma once

#include "mmtprobe/errors.hpp"
#include "mmtprobe/random.hpp"
#include "mmtprobe/tensor.hpp"
#include "mmtprobe/text.hpp"
#include "mmtprobe/features.hpp"
#include "mmtprobe/model.hpp"
#include "mmtprobe/decode.hpp"
#include "mmtprobe/metrics.hpp"
#include "mmtprobe/train.hpp"
#include "mmtprobe/synthetic.hpp"
#include "mmtprobe/config.hpp"
#include "mmtprobe/experiment.hpp"
