#pragma once

#include "floodnet/core.hpp"
#include "floodnet/crm.hpp"
#include "floodnet/rnn.hpp"
#include "floodnet/optimizer.hpp"
#include "floodnet/scenarios.hpp"
#include "floodnet/model_file.hpp"
#include "floodnet/analysis.hpp"
