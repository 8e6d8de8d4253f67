#pragma once

#include "tlens/errors.hpp"
#include "tlens/unicode.hpp"
#include "tlens/languages.hpp"
#include "tlens/lexicon.hpp"
#include "tlens/tokenizer.hpp"
#include "tlens/model.hpp"
#include "tlens/model_io.hpp"
#include "tlens/logitlens.hpp"
#include "tlens/trace_io.hpp"
#include "tlens/langid.hpp"
#include "tlens/metrics.hpp"
#include "tlens/report.hpp"
#include "tlens/trainer.hpp"
#include "tlens/pipeline.hpp"
