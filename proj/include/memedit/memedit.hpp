#pragma once

#include "memedit/common.hpp"
#include "memedit/memory_model.hpp"
#include "memedit/solvers.hpp"
#include "memedit/spectral.hpp"
#include "memedit/meta.hpp"
#include "memedit/fidelity.hpp"
#include "memedit/model_io.hpp"
#include "memedit/harness.hpp"
#include "memedit/verify.hpp"
