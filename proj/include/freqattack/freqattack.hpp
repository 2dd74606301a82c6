#pragma once

#include "freqattack/errors.hpp"
#include "freqattack/random.hpp"
#include "freqattack/tensor.hpp"
#include "freqattack/imaging.hpp"
#include "freqattack/spectral.hpp"
#include "freqattack/dataset.hpp"
#include "freqattack/models.hpp"
#include "freqattack/attacks.hpp"
#include "freqattack/metrics.hpp"
#include "freqattack/png_io.hpp"
#include "freqattack/harness.hpp"
