#include <math.h>
#include <stdio.h>
#include "confu.h"

int main(void) {
    double tc = 0.0;
    if (confu_tc_exact(1.0, &tc) != CONFU_STATUS_OK || fabs(tc - log(2.0)) > 1e-12) return 1;
    if (confu_tc_exact(-1.0, &tc) != CONFU_STATUS_INVALID_ARGUMENT) return 2;
    if (confu_last_error_message() == NULL) return 3;

    ConfuDataset *ds = NULL;
    const char *cfg = "{\"xor\": {\"d\": 2, \"n_train\": 40, \"n_test\": 40}}";
    if (confu_dataset_generate(cfg, &ds) != CONFU_STATUS_OK) return 4;
    size_t rows = 0, dim = 0;
    if (confu_dataset_shape(ds, CONFU_SPLIT_TEST, &rows, &dim) != CONFU_STATUS_OK) return 5;
    if (rows != 40 || dim != 2) return 6;
    confu_dataset_free(ds);
    printf("ok %s\n", confu_version());
    return 0;
}
