#pragma once

// Umbrella header: the full library.

#include "farann/common.hpp"
#include "farann/fabric.hpp"
#include "farann/hnsw.hpp"
#include "farann/insert_engine.hpp"
#include "farann/layout.hpp"
#include "farann/partitioner.hpp"
#include "farann/perf_model.hpp"
#include "farann/query_engine.hpp"
#include "farann/rebuild.hpp"
#include "farann/synthetic.hpp"
#include "farann/vectors.hpp"
#include "farann/wire.hpp"
