#pragma once

#include "cotrain/config.hpp"
#include "cotrain/core.hpp"
#include "cotrain/datagen.hpp"
#include "cotrain/io.hpp"
#include "cotrain/labeling.hpp"
#include "cotrain/metrics.hpp"
#include "cotrain/mixing.hpp"
#include "cotrain/pipeline.hpp"
#include "cotrain/preprocess.hpp"
#include "cotrain/protocol.hpp"
#include "cotrain/trainer.hpp"
