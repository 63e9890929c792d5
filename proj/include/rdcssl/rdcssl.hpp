#pragma once

// Umbrella header.
#include "rdcssl/error.hpp"
#include "rdcssl/rng.hpp"
#include "rdcssl/tensor.hpp"
#include "rdcssl/linalg.hpp"
#include "rdcssl/ops.hpp"
#include "rdcssl/gradcheck.hpp"
#include "rdcssl/serialize.hpp"
#include "rdcssl/mae.hpp"
#include "rdcssl/wkd.hpp"
#include "rdcssl/bke.hpp"
#include "rdcssl/replay_buffer.hpp"
#include "rdcssl/optim.hpp"
#include "rdcssl/metrics.hpp"
#include "rdcssl/data.hpp"
#include "rdcssl/classifier.hpp"
#include "rdcssl/config.hpp"
#include "rdcssl/log.hpp"
#include "rdcssl/pipeline.hpp"
