#ifndef CAST_CAST_HPP
#define CAST_CAST_HPP

#include "cast/analysis.hpp"
#include "cast/digest.hpp"
#include "cast/error.hpp"
#include "cast/harness.hpp"
#include "cast/io.hpp"
#include "cast/model.hpp"
#include "cast/numerics.hpp"
#include "cast/pipeline.hpp"
#include "cast/plan.hpp"
#include "cast/probing.hpp"
#include "cast/queryopt.hpp"
#include "cast/shiftvec.hpp"
#include "cast/steering.hpp"

#endif
