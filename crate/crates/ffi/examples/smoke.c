#include <stdio.h>
#include "nommer.h"
int main(void) {
    NommerModel *m = NULL;
    if (nommer_model_new_preset("micro", 1, &m) != NOMMER_STATUS_OK) return 1;
    size_t shape[3]; nommer_model_input_shape(m, shape);
    static double img[32*32*3]; double logits[2];
    for (int i = 0; i < 32*32*3; i++) img[i] = (i % 7) / 7.0;
    NommerStatus st = nommer_model_forward(m, img, 32*32*3, logits, 2);
    printf("%zu %zu %zu status %d logits %f %f version %s\n", shape[0], shape[1], shape[2], st, logits[0], logits[1], nommer_version());
    st = nommer_model_forward(m, img, 5, logits, 2);
    char buf[128]; nommer_last_error_message(buf, sizeof buf);
    printf("status %d: %s\n", st, buf);
    nommer_model_free(m);
    return 0;
}
