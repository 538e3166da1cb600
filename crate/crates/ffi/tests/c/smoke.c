#include <math.h>
#include <stdio.h>
#include <string.h>

#include "pomp.h"

static int fail(const char *what) {
    char msg[256];
    pomp_last_error_message(msg, sizeof msg);
    fprintf(stderr, "%s failed: %s\n", what, msg);
    return 1;
}

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke <checkpoint path>\n");
        return 2;
    }
    double m = 0.0;
    if (pomp_adaptive_margin(2, 3, &m) != POMP_STATUS_OK) return fail("adaptive_margin");
    if (fabs(m - log(2.0)) > 1e-12) return fail("margin value");
    if (pomp_adaptive_margin(0, 3, &m) != POMP_STATUS_INVALID_ARGUMENT) return fail("margin error code");
    char msg[8];
    size_t full = pomp_last_error_message(msg, sizeof msg);
    if (full == 0 || strlen(msg) != 7) return fail("truncated message");

    PompPrompt *p = NULL;
    if (pomp_prompt_init(2, 3, 5, &p) != POMP_STATUS_OK) return fail("prompt_init");
    if (pomp_checkpoint_save(p, 4, 5, argv[1]) != POMP_STATUS_OK) return fail("checkpoint_save");
    PompPrompt *q = NULL;
    uint64_t step = 0, seed = 0;
    if (pomp_checkpoint_load(argv[1], &q, &step, &seed) != POMP_STATUS_OK) return fail("checkpoint_load");
    double a[6], b[6];
    pomp_prompt_copy(p, a, 6);
    pomp_prompt_copy(q, b, 6);
    if (memcmp(a, b, sizeof a) != 0 || step != 4 || seed != 5) return fail("round trip");
    pomp_prompt_free(p);
    pomp_prompt_free(q);
    puts("ok");
    return 0;
}
