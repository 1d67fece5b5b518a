"""Adversarial attacks and the clean/adversarial training trade-off.

Trains two sparse models on the same budget: one on clean loss only, one on
the hybrid objective that mixes clean and adversarial cross-entropy 50/50.
Then measures both under FGSM and PGD at growing strengths. The hybrid
model gives up a little clean accuracy and keeps far more under attack.
"""

from rewirenet.attacks import AttackConfig
from rewirenet.data import load_dataset
from rewirenet.harness import ExperimentConfig, attack_sweep, evaluate, run_training

common = dict(
    arch="conv-tiny", dataset="synth-digits",
    train_samples=2000, test_samples=1000, eval_samples=256,
    batch_size=128, epochs=8, lr_milestones=(5, 7),
    density=0.1, warmup_epochs=2, rho=1e-4,
    train_epsilon=0.1, train_alpha=0.025, train_iterations=7,
    eval_epsilon=0.0, seed=0,
)

clean_model = run_training(ExperimentConfig(**common, beta=1.0))["model"]
hybrid_model = run_training(ExperimentConfig(**common, beta=0.5))["model"]

test = load_dataset("synth-digits", "test", num_samples=1000).take(512)
attack = AttackConfig(epsilon=0.1, alpha=0.025, iterations=7)

for name, model in (("clean-trained", clean_model), ("hybrid-trained", hybrid_model)):
    scores = evaluate(model, test, attack)
    print(f"{name:15s} clean {scores['clean_acc']:.3f}  "
          f"fgsm {scores['fgsm_acc']:.3f}  pgd {scores['pgd_acc']:.3f}")

print("\npgd accuracy vs epsilon (k=7), hybrid model:")
sweep = attack_sweep(hybrid_model, test, epsilons=[0.0, 0.02, 0.05, 0.1, 0.15],
                     iterations_list=[1, 3, 7, 15], alpha=0.025,
                     fixed_epsilon=0.1, fixed_iterations=7)
for eps, acc in sweep["pgd_epsilon"]:
    print(f"  eps {eps:4.2f}  acc {acc:.3f}")
print("pgd accuracy vs iterations (eps=0.1):")
for k, acc in sweep["pgd_iterations"]:
    print(f"  k {k:3d}  acc {acc:.3f}")
