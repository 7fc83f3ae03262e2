#pragma once

#include "kws/audio_io.hpp"
#include "kws/autodiff.hpp"
#include "kws/checkpoint.hpp"
#include "kws/config.hpp"
#include "kws/dsp.hpp"
#include "kws/error.hpp"
#include "kws/eval.hpp"
#include "kws/layers.hpp"
#include "kws/matrix.hpp"
#include "kws/models.hpp"
#include "kws/random.hpp"
#include "kws/training.hpp"
