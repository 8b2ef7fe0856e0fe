#pragma once

#include "knlab/core.hpp"
#include "knlab/corpus.hpp"
#include "knlab/model.hpp"
#include "knlab/attribution.hpp"
#include "knlab/analysis.hpp"
#include "knlab/evaluation.hpp"
#include "knlab/report.hpp"
#include "knlab/config.hpp"
#include "knlab/pipeline.hpp"
