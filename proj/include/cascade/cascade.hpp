#pragma once

// Everything except the chat-API pipeline (cascade/qualitative.hpp), which
// needs OpenSSL.

#include "cascade/common.hpp"
#include "cascade/corpus.hpp"
#include "cascade/ensemble.hpp"
#include "cascade/experiment.hpp"
#include "cascade/knowledge.hpp"
#include "cascade/metrics.hpp"
#include "cascade/model.hpp"
#include "cascade/sweep.hpp"
#include "cascade/trainer.hpp"
#include "cascade/windows.hpp"
