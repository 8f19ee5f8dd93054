// Umbrella header.
#pragma once

#include "sage/cli.hpp"
#include "sage/config.hpp"
#include "sage/errors.hpp"
#include "sage/eval.hpp"
#include "sage/explain.hpp"
#include "sage/grad_check.hpp"
#include "sage/inverse.hpp"
#include "sage/model.hpp"
#include "sage/prob.hpp"
#include "sage/serialize.hpp"
#include "sage/tasks.hpp"
#include "sage/tensor.hpp"
#include "sage/tokens.hpp"
#include "sage/trace.hpp"
#include "sage/training.hpp"
