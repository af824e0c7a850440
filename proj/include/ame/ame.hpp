#pragma once

#include <ame/config.hpp>
#include <ame/core.hpp>
#include <ame/error.hpp>
#include <ame/experiment.hpp>
#include <ame/hierarchy.hpp>
#include <ame/knockoffs.hpp>
#include <ame/lasso.hpp>
#include <ame/oracle.hpp>
#include <ame/rng.hpp>
#include <ame/sampling.hpp>
#include <ame/serialize.hpp>
#include <ame/shapley.hpp>
