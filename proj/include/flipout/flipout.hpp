#pragma once

// Everything except the experiment runner (flipout/experiment.hpp), which
// also pulls in the config parser and JSON output.

#include "flipout/bbb.hpp"
#include "flipout/checkpoint.hpp"
#include "flipout/core.hpp"
#include "flipout/data.hpp"
#include "flipout/es.hpp"
#include "flipout/gradcheck.hpp"
#include "flipout/net.hpp"
#include "flipout/optim.hpp"
#include "flipout/parallel.hpp"
#include "flipout/params.hpp"
#include "flipout/perturb.hpp"
#include "flipout/prng.hpp"
#include "flipout/runlog.hpp"
#include "flipout/stats.hpp"
#include "flipout/variance_lab.hpp"
