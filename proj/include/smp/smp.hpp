#pragma once

#include "smp/errors.hpp"
#include "smp/rng.hpp"
#include "smp/morphology.hpp"
#include "smp/kinematics.hpp"
#include "smp/variants.hpp"
#include "smp/sim.hpp"
#include "smp/autodiff.hpp"
#include "smp/policy.hpp"
#include "smp/rl.hpp"
#include "smp/baseline.hpp"
#include "smp/trainer.hpp"
#include "smp/analysis.hpp"
