#pragma once

// Umbrella header.
#include "regionroute/ablation.hpp"
#include "regionroute/attention.hpp"
#include "regionroute/checkpoint.hpp"
#include "regionroute/cli.hpp"
#include "regionroute/common.hpp"
#include "regionroute/dataset.hpp"
#include "regionroute/gradcheck.hpp"
#include "regionroute/image.hpp"
#include "regionroute/linear.hpp"
#include "regionroute/metrics.hpp"
#include "regionroute/model.hpp"
#include "regionroute/scenes.hpp"
#include "regionroute/schedule.hpp"
#include "regionroute/styles.hpp"
#include "regionroute/supervision.hpp"
#include "regionroute/tensor.hpp"
#include "regionroute/tokenizer.hpp"
#include "regionroute/trainer.hpp"
