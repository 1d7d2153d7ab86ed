// Generates a small corpus, trains the two-branch detector for a couple of
// epochs, fine-tunes the transforms and prints test metrics.

#include "afd/afd.hpp"

#include <iostream>

int main() {
    using namespace afd;
    RunConfig rc;
    rc.data.count = 60;
    rc.data.size = 32;
    rc.train.model.height = rc.train.model.width = 32;
    rc.train.adad_epochs = 3;
    rc.train.adat_iters = 40;
    rc.train.adat_eval_interval = 20;

    const auto corpus = generate_corpus(rc.data);
    TrainHooks hooks;
    hooks.log = &std::cout;
    const auto adad = train_adad(rc, corpus, hooks);
    const auto adat = train_adat(adad, corpus, hooks);

    for (const auto* ckpt : {&adad, &adat}) {
        const auto report = evaluate(*ckpt, corpus, Split::test);
        std::cout << to_string(ckpt->phase) << " test acc " << report.whole.acc << " auc "
                  << report.whole.auc.value_or(0.5) << "\n";
        for (const auto& row : report.per_domain)
            std::cout << "  domain " << row.domain << " auc " << row.metrics.auc.value_or(0.5) << "\n";
    }
    const auto model = model_from_checkpoint(adat);
    const auto att = model.routing();
    std::cout << "attention (band x layer):\n";
    for (std::size_t i = 0; i < att.dim(0); ++i) {
        for (std::size_t j = 0; j < att.dim(1); ++j) std::cout << " " << att.at(i * att.dim(1) + j);
        std::cout << "\n";
    }
}
