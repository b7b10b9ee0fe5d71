// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "smsp/common.hpp"
#include "smsp/gradcore.hpp"
#include "smsp/maskednet.hpp"
#include "smsp/data.hpp"
#include "smsp/record.hpp"
#include "smsp/poolstore.hpp"
#include "smsp/amp.hpp"
#include "smsp/tasksim.hpp"
#include "smsp/one_shot.hpp"
#include "smsp/bench.hpp"
#include "smsp/config.hpp"
#include "smsp/experiment.hpp"
