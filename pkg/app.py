# app.py
from src.cure_training import TrainConfig, Trainer, evaluate, make_synthetic, training_mode
from src.cure_training.losses import LossResult, max_loss, l1_penalty


# ------------------------------------------------------------------
# Example 1: a custom training mode
# ------------------------------------------------------------------
# Registered modes can be selected with `mode=` like the built-in ones
# (linf, l2, joint, max, random, scratch, finetune).
@training_mode("max_l1", includes_l1=True)
def max_with_strong_l1(net, x, y, cfg, ctx) -> LossResult:
    result = max_loss(net, x, y, cfg)
    value, grads = l1_penalty(net, 10 * cfg.l1_weight)
    result.value += value
    result.grads = result.grads + grads
    return result


# ------------------------------------------------------------------
# Example 2: train and certify on synthetic blobs
# ------------------------------------------------------------------
if __name__ == "__main__":
    cfg = TrainConfig(
        mode="scratch",
        arch="fc",
        synthetic_n=256,
        synthetic_classes=4,
        eps_inf=0.1,
        eps_2=0.5,
        epochs=6,
        anneal_epochs=3,
        lr=1e-3,
        lr_decay_epochs=(4, 5),
        batch_size=64,
        out_dir="runs/demo",
    ).validate()

    train_set = make_synthetic(cfg.synthetic_n, cfg.synthetic_classes, (1, 8, 8), seed=cfg.seed)
    test_set = make_synthetic(128, cfg.synthetic_classes, (1, 8, 8), seed=cfg.seed, split="test")

    print("[BOOT] Training on synthetic data...")
    trainer = Trainer(cfg, train_set, out_dir=cfg.out_dir)
    trainer.install_signal_handlers()  # Ctrl-C finishes the current epoch, then stops
    net, log = trainer.train()

    report = evaluate(net, test_set, cfg.eps_inf, cfg.eps_2, attack_steps=20, restarts=1)
    print(f"[DONE] {report.aggregates}")
