#pragma once

#include "cotr/errors.hpp"
#include "cotr/tensor.hpp"
#include "cotr/ops.hpp"
#include "cotr/gradcheck.hpp"
#include "cotr/optim.hpp"
#include "cotr/geometry.hpp"
#include "cotr/model.hpp"
#include "cotr/synth.hpp"
#include "cotr/metrics.hpp"
#include "cotr/io.hpp"
#include "cotr/train.hpp"
#include "cotr/delaunay.hpp"
#include "cotr/infer.hpp"
#include "cotr/corpus.hpp"
#include "cotr/config.hpp"
