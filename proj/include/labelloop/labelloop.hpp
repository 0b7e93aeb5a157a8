// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "labelloop/backends.hpp"
#include "labelloop/chisq.hpp"
#include "labelloop/config.hpp"
#include "labelloop/corpus.hpp"
#include "labelloop/error.hpp"
#include "labelloop/evalstats.hpp"
#include "labelloop/filterpipe.hpp"
#include "labelloop/finetuner.hpp"
#include "labelloop/http_backend.hpp"
#include "labelloop/mock_backend.hpp"
#include "labelloop/prompts.hpp"
#include "labelloop/selfloop.hpp"
#include "labelloop/service.hpp"
