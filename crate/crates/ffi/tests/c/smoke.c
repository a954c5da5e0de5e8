#include <math.h>
#include <stdio.h>
#include "duesenberry.h"

static const char *TOML =
    "[scenario]\nkind = \"rentier\"\n";

int main(void) {
    DsbConfig *cfg = NULL;
    DsbRun *run = NULL;
    char msg[512];

    if (dsb_config_from_toml(TOML, &cfg) != DSB_STATUS_INVALID_CONFIG || cfg != NULL) return 10;
    dsb_last_error_message(msg, sizeof msg);
    if (msg[0] == '\0') return 11;

    if (dsb_config_desk(DSB_SCENARIO_EXAMPLE51, &cfg) != DSB_STATUS_OK) return 12;
    if (dsb_config_set_ensemble(cfg, 50, 9) != DSB_STATUS_OK) return 13;
    if (dsb_run_new(cfg, &run) != DSB_STATUS_OK) return 14;

    size_t steps = 0;
    dsb_run_steps(run, &steps);
    double h[1024];
    if (steps + 1 > 1024) return 15;
    if (dsb_run_copy_series(run, DSB_SERIES_STATE_PRICE, 0, h, 1) != DSB_STATUS_BUFFER_TOO_SMALL) return 16;
    if (dsb_run_copy_series(run, DSB_SERIES_STATE_PRICE, 0, h, steps + 1) != DSB_STATUS_OK) return 17;
    if (fabs(h[0] - 1.0) > 1e-12) return 18;

    double residual = 1.0;
    bool pass = false;
    if (dsb_run_clearing(run, &residual, &pass) != DSB_STATUS_OK || !pass) return 19;

    double ep, theta;
    if (dsb_table1_row(0.2, 0.06, &ep, &theta) != DSB_STATUS_OK) return 20;
    if (fabs(ep - 0.04) > 1e-15 || fabs(theta - 0.3) > 1e-15) return 21;

    printf("ok %s steps=%zu residual=%.3e\n", dsb_version(), steps, residual);
    dsb_run_free(run);
    dsb_config_free(cfg);
    return 0;
}
