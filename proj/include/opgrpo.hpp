#pragma once

// Everything in one include.

#include "opgrpo/adam.hpp"
#include "opgrpo/checkpoint.hpp"
#include "opgrpo/config.hpp"
#include "opgrpo/diagnostics.hpp"
#include "opgrpo/error.hpp"
#include "opgrpo/experiments.hpp"
#include "opgrpo/flow_model.hpp"
#include "opgrpo/grpo_objective.hpp"
#include "opgrpo/metrics.hpp"
#include "opgrpo/replay_buffer.hpp"
#include "opgrpo/rewards.hpp"
#include "opgrpo/rng.hpp"
#include "opgrpo/rollout.hpp"
#include "opgrpo/schedule.hpp"
#include "opgrpo/tensor.hpp"
#include "opgrpo/trainer.hpp"
#include "opgrpo/velocity_field.hpp"
