#pragma once

#include "dualcp/binary_io.hpp"
#include "dualcp/calibrator.hpp"
#include "dualcp/cpg.hpp"
#include "dualcp/dil_harness.hpp"
#include "dualcp/embedding_store.hpp"
#include "dualcp/error.hpp"
#include "dualcp/rng.hpp"
#include "dualcp/synth.hpp"
#include "dualcp/verify.hpp"
