#pragma once

// Umbrella header for the OSPO preference-pair construction and optimization
// library.

#include "ospo/analysis.hpp"
#include "ospo/backend.hpp"
#include "ospo/errors.hpp"
#include "ospo/keywords.hpp"
#include "ospo/manifest.hpp"
#include "ospo/perturb.hpp"
#include "ospo/pipeline.hpp"
#include "ospo/prompt.hpp"
#include "ospo/prompt_forge.hpp"
#include "ospo/questions.hpp"
#include "ospo/remote.hpp"
#include "ospo/rng.hpp"
#include "ospo/scene.hpp"
#include "ospo/selection.hpp"
#include "ospo/simpo.hpp"
#include "ospo/simulator.hpp"
#include "ospo/text.hpp"
#include "ospo/vqa.hpp"
