import numpy as np, time, json
from flowcast import data, backbone, stunet, cascade, optim, metrics

THR = metrics.DEFAULT_THRESHOLDS

def diag(tag, params, bb_steps=700, fl_steps=500, seed=1, n_train=40, n_test=10, sampler=12):
    rng = np.random.default_rng(seed)
    t0 = time.time()
    train = [s for q in data.synth_advection(seed*1000+1, n_train, 25, 32, 32, params) for s in data.window_samples(q)]
    test  = [s for q in data.synth_advection(seed*1000+2, n_test, 25, 32, 32, params) for s in data.window_samples(q)]
    bb = backbone.Backbone(backbone.BackboneConfig(), rng)
    backbone.train_backbone(bb, train, steps=bb_steps, batch=8, rng=rng,
                            spec=optim.OptimizerSpec(lr_max=3e-3, lr_min=1e-5))
    bb.freeze()
    sched = cascade.SegmentSchedule(5, 20)
    rect = stunet.STUNet(stunet.STUNetConfig(index_vocab=5), rng)
    cascade.train_rectifier(rect, bb, train, steps=fl_steps, batch=8, rng=rng, schedule=sched,
                            spec=optim.OptimizerSpec(lr_max=2e-3, lr_min=1e-5))
    gen = stunet.STUNet(stunet.STUNetConfig(), rng)
    cascade.train_generator(gen, bb, train, steps=fl_steps, batch=8, rng=rng, schedule=sched,
                            spec=optim.OptimizerSpec(lr_max=2e-3, lr_min=1e-5))
    mus, fulls, gts = [], [], []
    for i, s in enumerate(test):
        mus.append(backbone.backbone_forward(bb, s.input))
        f, _, _ = cascade.generate_forecast(s.input, bb, rect, gen, sched, steps_rect=sampler, steps_gen=sampler, seed=900+i)
        fulls.append(f); gts.append(s.target)
    out = {"tag": tag, "t": round(time.time()-t0)}
    # per-threshold CSI aggregated over leads, plus event rates
    for name, preds in (("bb", mus), ("full", fulls)):
        per_thr = []
        for j, thr in enumerate(THR):
            cells = metrics.cell_counts(preds, gts, 1, [thr])
            vals = [metrics.csi(row[0]) for row in cells if not row[0].vacuous()]
            per_thr.append(round(float(np.mean(vals)), 3) if vals else None)
        out[f"csi_thr_{name}"] = per_thr
        out[f"csi_{name}"] = round(metrics.aggregate_report(preds, gts, THR)["csi"], 4)
    out["evrate_gt"]   = [round(float(np.mean([ (g >= t/255).mean() for g in gts])),4) for t in THR]
    out["evrate_bb"]   = [round(float(np.mean([ (p >= t/255).mean() for p in mus])),4) for t in THR]
    out["evrate_full"] = [round(float(np.mean([ (p >= t/255).mean() for p in fulls])),4) for t in THR]
    # late-lead breakdown (leads 11-20 only)
    mus_l = [m[10:] for m in mus]; fulls_l = [f[10:] for f in fulls]; gts_l = [g[10:] for g in gts]
    out["csi_late_bb"] = round(metrics.aggregate_report(mus_l, gts_l, THR)["csi"], 4)
    out["csi_late_full"] = round(metrics.aggregate_report(fulls_l, gts_l, THR)["csi"], 4)
    print(json.dumps(out), flush=True)

P = data.AdvectionParams
diag("E_plateau", P(n_cells=3, max_speed=0.7, diffusion=0.04, growth_decay=-0.015, noise=0.15,
                    noise_corr=5.0, amp_range=(0.75, 1.0), sigma_range=(3.0, 5.5)))
diag("F_plateau_nofade", P(n_cells=3, max_speed=0.7, diffusion=0.04, growth_decay=0.0, noise=0.20,
                           noise_corr=5.0, amp_range=(0.75, 1.0), sigma_range=(3.0, 5.5)))
