#pragma once

#include "cfmplan/diffcore/checkpoint.hpp"
#include "cfmplan/diffcore/layers.hpp"
#include "cfmplan/diffcore/params.hpp"
#include "cfmplan/diffcore/tape.hpp"
#include "cfmplan/diffcore/tensor.hpp"
