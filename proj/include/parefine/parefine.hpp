#pragma once

#include "parefine/backbone.hpp"
#include "parefine/checkpoint.hpp"
#include "parefine/config.hpp"
#include "parefine/dataset.hpp"
#include "parefine/errors.hpp"
#include "parefine/gradcheck.hpp"
#include "parefine/layers.hpp"
#include "parefine/losses.hpp"
#include "parefine/metrics.hpp"
#include "parefine/model.hpp"
#include "parefine/mrsg.hpp"
#include "parefine/ops.hpp"
#include "parefine/param_store.hpp"
#include "parefine/pnm.hpp"
#include "parefine/rce.hpp"
#include "parefine/rng.hpp"
#include "parefine/synth.hpp"
#include "parefine/tensor.hpp"
#include "parefine/training.hpp"
