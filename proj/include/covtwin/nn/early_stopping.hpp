// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#pragma once

#include <limits>
#include <vector>

namespace covtwin::nn {

struct EarlyStopOutcome {
    int epochs_run = 0;
    int best_epoch = 0;  // 1-based; 0 if no epoch ran
    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<double> history;
};

/// Runs epochs until `patience` consecutive epochs fail to improve the
/// monitored loss (strictly), or `max_epochs` is reached. `run_epoch(e)`
/// trains epoch e and returns its validation loss; `on_improve()` snapshots
/// the weights; `restore_best()` is called once at the end.
template <class RunEpoch, class OnImprove, class RestoreBest>
EarlyStopOutcome train_with_early_stopping(int max_epochs, int patience, RunEpoch&& run_epoch,
                                           OnImprove&& on_improve, RestoreBest&& restore_best) {
    EarlyStopOutcome out;
    for (int epoch = 1; epoch <= max_epochs; ++epoch) {
        const double loss = run_epoch(epoch);
        out.history.push_back(loss);
        out.epochs_run = epoch;
        if (loss < out.best_loss) {
            out.best_loss = loss;
            out.best_epoch = epoch;
            on_improve();
        } else if (epoch - out.best_epoch >= patience) {
            break;
        }
    }
    if (out.best_epoch > 0) restore_best();
    return out;
}

}  // namespace covtwin::nn
