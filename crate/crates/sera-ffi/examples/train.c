#include <assert.h>
#include <stdio.h>
#include "sera.h"

int main(void) {
    SeraWorld *world = NULL;
    assert(sera_world_create(6, 2.0, 9, &world) == SERA_STATUS_OK);
    SeraDataset *data = NULL;
    assert(sera_dataset_generate(world, NULL, 120, 0.2, 0.0, false,
                                 1.0, 1.0, 0, 9, &data) == SERA_STATUS_OK);
    SeraPolicy *sft = NULL;
    assert(sera_policy_fit_sft(world, data, 60, 0.1, &sft) == SERA_STATUS_OK);
    SeraRunConfig cfg;
    assert(sera_run_config_defaults(SERA_LOSS_DPO, 120, 9, &cfg) == SERA_STATUS_OK);
    cfg.epochs_per_iter = 5;
    SeraRun *run = NULL;
    assert(sera_train(world, sft, data, &cfg, &run) == SERA_STATUS_OK);
    size_t n = 0;
    assert(sera_run_snapshot_count(run, &n) == SERA_STATUS_OK && n == 4);
    SeraPolicy *last = NULL;
    assert(sera_run_snapshot(run, 3, &last) == SERA_STATUS_OK);
    double score = -1.0;
    assert(sera_win_rate(world, last, sft, 200, 1.0, 1.0, 0, 7, &score) == SERA_STATUS_OK);
    printf("version %s, snapshots %zu, win-rate vs start %.3f\n", sera_version(), n, score);
    sera_policy_free(last);
    sera_run_free(run);
    sera_policy_free(sft);
    sera_dataset_free(data);
    sera_world_free(world);
    return 0;
}
