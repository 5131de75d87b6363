#pragma once

#include "mmdense/error.hpp"
#include "mmdense/tensor.hpp"
#include "mmdense/autodiff.hpp"
#include "mmdense/gradcheck.hpp"
#include "mmdense/layers.hpp"
#include "mmdense/arch_spec.hpp"
#include "mmdense/model.hpp"
#include "mmdense/wav.hpp"
#include "mmdense/stft.hpp"
#include "mmdense/separate.hpp"
#include "mmdense/synth.hpp"
#include "mmdense/rmsprop.hpp"
#include "mmdense/checkpoint.hpp"
#include "mmdense/train.hpp"
#include "mmdense/metrics.hpp"
#include "mmdense/evaluate.hpp"
#include "mmdense/runtime.hpp"
