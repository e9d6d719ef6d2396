#include <stdio.h>
#include <string.h>
#include "distzo.h"

static int fail(const char *what, DzStatus s) {
    const char *msg = dz_last_error_message();
    fprintf(stderr, "%s: status %d: %s\n", what, (int)s, msg ? msg : "(none)");
    return 1;
}

int main(void) {
    const char *cfg = "{\"vocab_size\":16,\"d_model\":8,\"n_heads\":2,\"n_blocks\":2,\"seq_len\":8}";
    DzModel *m = NULL;
    DzStatus s = dz_model_new(cfg, 7, &m);
    if (s != DZ_STATUS_OK) return fail("new", s);

    size_t n = 0;
    if ((s = dz_model_param_count(m, &n)) != DZ_STATUS_OK) return fail("count", s);

    DzStep step;
    for (uint64_t i = 0; i < 3; i++) {
        if ((s = dz_mezo_step(m, 1e-3, 1e-2, 4, 1, 100 + i, i, &step)) != DZ_STATUS_OK) return fail("step", s);
    }
    uint64_t sum = 0;
    dz_model_checksum(m, &sum);

    double g = 0.0;
    if (dz_zo_grad(1.0, 1.0, 0.0, &g) != DZ_STATUS_NUMERIC) return 2;
    if (dz_last_error_message() == NULL) return 3;
    if (dz_model_new("{\"vocab_size\":0}", 0, &m) != DZ_STATUS_CONFIG) return 4;

    double span = 0.0;
    if ((s = dz_comm_sliced_upload_makespan(1.0, 3.0, 0.0, 4, 12, &span)) != DZ_STATUS_OK) return fail("comm", s);

    printf("version=%s params=%zu g=%.17g checksum=%016llx span=%g\n", dz_version(), n, step.g,
           (unsigned long long)sum, span);
    dz_model_free(m);
    return 0;
}
