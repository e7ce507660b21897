// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include "linmerge/dataset.hpp"
#include "linmerge/decomposer.hpp"
#include "linmerge/error.hpp"
#include "linmerge/features.hpp"
#include "linmerge/fixture.hpp"
#include "linmerge/matrix.hpp"
#include "linmerge/merge.hpp"
#include "linmerge/metrics.hpp"
#include "linmerge/model.hpp"
#include "linmerge/random.hpp"
#include "linmerge/runner.hpp"
#include "linmerge/solver.hpp"
#include "linmerge/tensor_archive.hpp"
