#pragma once

#include "ostrack/tensor.hpp"
#include "ostrack/ops.hpp"
#include "ostrack/gradcheck.hpp"
#include "ostrack/optim.hpp"
#include "ostrack/serialize.hpp"
#include "ostrack/config.hpp"
#include "ostrack/embedder.hpp"
#include "ostrack/box.hpp"
#include "ostrack/attention.hpp"
#include "ostrack/elimination.hpp"
#include "ostrack/encoder.hpp"
#include "ostrack/head.hpp"
#include "ostrack/objectives.hpp"
#include "ostrack/model.hpp"
#include "ostrack/image.hpp"
#include "ostrack/bench.hpp"
#include "ostrack/pipeline.hpp"
