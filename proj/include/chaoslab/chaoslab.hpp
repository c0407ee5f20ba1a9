#pragma once

#include <chaoslab/core.hpp>
#include <chaoslab/random.hpp>
#include <chaoslab/parallel.hpp>
#include <chaoslab/kernels.hpp>
#include <chaoslab/density.hpp>
#include <chaoslab/dynamics.hpp>
#include <chaoslab/meanfield.hpp>
#include <chaoslab/metrics.hpp>
#include <chaoslab/fit.hpp>
#include <chaoslab/lln.hpp>
#include <chaoslab/alpha.hpp>
#include <chaoslab/plan.hpp>
#include <chaoslab/harness.hpp>
