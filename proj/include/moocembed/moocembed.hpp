// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "analysis.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "errors.hpp"
#include "harness.hpp"
#include "ingest.hpp"
#include "models.hpp"
#include "nn.hpp"
#include "numeric.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "synth.hpp"
