#pragma once

#include "r3/controller.hpp"
#include "r3/correctness.hpp"
#include "r3/elites.hpp"
#include "r3/eval_result.hpp"
#include "r3/kernel_dsl.hpp"
#include "r3/kernel_sim.hpp"
#include "r3/mutation.hpp"
#include "r3/prompt.hpp"
#include "r3/replay_db.hpp"
#include "r3/replay_server.hpp"
#include "r3/scheduler.hpp"
#include "r3/tune_space.hpp"
#include "r3/tuner.hpp"
#include "r3/util.hpp"
