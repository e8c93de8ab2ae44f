#include <stdio.h>
#include "gmner.h"

int main(void) {
    /* 2 labels, 1 feature: W(2) b(2) T(4) start(2) end(2) */
    double params[12] = {1.0, -1.0, 0, 0, 0.5, 0, 0, 0.5, 0, 0, 0, 0};
    GmnerCrf *crf = NULL;
    if (gmner_crf_from_params(2, 1, params, 12, &crf) != GMNER_STATUS_OK) return 1;
    double emb[3] = {2.0, -2.0, 2.0};
    uint32_t path[3];
    double score = 0, z = 0, marg[6];
    if (gmner_crf_viterbi(crf, emb, 3, path, &score) != GMNER_STATUS_OK) return 2;
    if (gmner_crf_log_partition(crf, emb, 3, &z) != GMNER_STATUS_OK) return 3;
    if (gmner_crf_marginals(crf, emb, 3, marg) != GMNER_STATUS_OK) return 4;
    if (gmner_crf_viterbi(crf, emb, 3, NULL, NULL) != GMNER_STATUS_NULL_POINTER) return 5;
    if (gmner_last_error() == NULL) return 6;
    gmner_crf_free(crf);

    GmnerBox a = {0, 0, 10, 10}, b = {0, 0, 10, 20};
    size_t top[2];
    double scores[3] = {0.2, 0.9, 0.9};
    if (gmner_topk(scores, 3, 2, top) != GMNER_STATUS_OK) return 7;
    printf("%u %u %u %.6f %.6f %.3f %zu %zu\n", path[0], path[1], path[2], score, z, gmner_iou(a, b), top[0], top[1]);
    return 0;
}
