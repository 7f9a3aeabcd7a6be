#pragma once

#include "stab/autodiff.hpp"
#include "stab/checkpoint.hpp"
#include "stab/datasets.hpp"
#include "stab/error.hpp"
#include "stab/fi.hpp"
#include "stab/harness.hpp"
#include "stab/io.hpp"
#include "stab/merge.hpp"
#include "stab/numeric.hpp"
#include "stab/parallel.hpp"
#include "stab/random.hpp"
#include "stab/reference.hpp"
#include "stab/sequence_fi.hpp"
#include "stab/zoo.hpp"
