#pragma once

#include "fwdfed/commands.hpp"
#include "fwdfed/config.hpp"
#include "fwdfed/data.hpp"
#include "fwdfed/error.hpp"
#include "fwdfed/federation.hpp"
#include "fwdfed/fwdgrad.hpp"
#include "fwdfed/model.hpp"
#include "fwdfed/objective.hpp"
#include "fwdfed/pacing.hpp"
#include "fwdfed/peft.hpp"
#include "fwdfed/peft_profile.hpp"
#include "fwdfed/rng.hpp"
#include "fwdfed/sampling.hpp"
#include "fwdfed/vector_ops.hpp"
#include "fwdfed/wire.hpp"
