#pragma once

#include "mnarflow/core.hpp"
#include "mnarflow/random.hpp"
#include "mnarflow/parallel.hpp"
#include "mnarflow/graph.hpp"
#include "mnarflow/sem.hpp"
#include "mnarflow/likelihood.hpp"
#include "mnarflow/dataset.hpp"
#include "mnarflow/mnar.hpp"
#include "mnarflow/imputation.hpp"
#include "mnarflow/trainer.hpp"
#include "mnarflow/bench.hpp"
#include "mnarflow/checkpoint.hpp"
