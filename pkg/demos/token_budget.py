"""Token counts and reference-attention cost for the paper_scale and toy presets."""
from tavr.config import preset_config
from tavr.tokenizer import LatentGeometry, cost_report, count_tokens

for name in ("paper_scale", "toy"):
    cfg = preset_config(name)
    geo = LatentGeometry(cfg["geometry.c_s"], cfg["geometry.c_t"], cfg["geometry.p"])
    budget = count_tokens(cfg["world.T"], cfg["world.H"], cfg["world.W"], geo, T_ref=cfg["flops.ref_frames"])
    rep = cost_report(budget, cfg["model.d"])
    print(f"{name}: {budget.as_dict()}  ->  {rep.flops:.4e} FLOPs at d={cfg['model.d']}")

# keeping only half of the full-scale reference tokens
cfg = preset_config("paper_scale")
geo = LatentGeometry(8, 4, 2)
half = count_tokens(81, 480, 896, geo, T_ref=20, ref_keep_fraction=0.5)
print("half the reference tokens:", half.n_total, f"{cost_report(half, 5120).tflops:.2f} TFLOPs")
