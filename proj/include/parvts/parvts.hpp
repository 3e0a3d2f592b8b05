#pragma once

#include "parvts/numerics.hpp"
#include "parvts/saliency.hpp"
#include "parvts/transformer.hpp"
#include "parvts/scheduler.hpp"
#include "parvts/cost_model.hpp"
#include "parvts/oracle.hpp"
#include "parvts/config.hpp"
#include "parvts/harness.hpp"
#include "parvts/verify.hpp"
