#pragma once

#include "frmil/adam.hpp"
#include "frmil/autodiff.hpp"
#include "frmil/bag_data.hpp"
#include "frmil/baseline.hpp"
#include "frmil/checkpoint.hpp"
#include "frmil/config.hpp"
#include "frmil/error.hpp"
#include "frmil/metrics.hpp"
#include "frmil/model.hpp"
#include "frmil/objectives.hpp"
#include "frmil/selftest.hpp"
#include "frmil/tensor.hpp"
#include "frmil/training.hpp"
