import numpy as np, time, json
from flowcast import data, backbone, stunet, cascade, optim, metrics

def run(tag, params, bb_steps=700, fl_steps=400, seed=1, n_train=40, n_test=10):
    rng = np.random.default_rng(seed)
    t0 = time.time()
    train = [s for q in data.synth_advection(seed*1000+1, n_train, 25, 32, 32, params) for s in data.window_samples(q)]
    test  = [s for q in data.synth_advection(seed*1000+2, n_test, 25, 32, 32, params) for s in data.window_samples(q)]
    bb = backbone.Backbone(backbone.BackboneConfig(), rng)
    bl = backbone.train_backbone(bb, train, steps=bb_steps, batch=8, rng=rng,
                                 spec=optim.OptimizerSpec(lr_max=3e-3, lr_min=1e-5))
    bb.freeze()
    sched = cascade.SegmentSchedule(5, 20)
    rect = stunet.STUNet(stunet.STUNetConfig(index_vocab=5), rng)
    cascade.train_rectifier(rect, bb, train, steps=fl_steps, batch=8, rng=rng, schedule=sched,
                            spec=optim.OptimizerSpec(lr_max=2e-3, lr_min=1e-5))
    gen = stunet.STUNet(stunet.STUNetConfig(), rng)
    cascade.train_generator(gen, bb, train, steps=fl_steps, batch=8, rng=rng, schedule=sched,
                            spec=optim.OptimizerSpec(lr_max=2e-3, lr_min=1e-5))
    mus, fulls, rects, gts = [], [], [], []
    for i, s in enumerate(test):
        mus.append(backbone.backbone_forward(bb, s.input))
        f, _, _ = cascade.generate_forecast(s.input, bb, rect, gen, sched, steps_rect=10, steps_gen=10, seed=900+i)
        r, _, _ = cascade.generate_forecast(s.input, bb, rect, None, sched, steps_rect=10, steps_gen=10, seed=900+i, mode="no_generator")
        fulls.append(f); rects.append(r); gts.append(s.target)
    rb = metrics.aggregate_report(mus, gts); rf = metrics.aggregate_report(fulls, gts); rr = metrics.aggregate_report(rects, gts)
    from scipy.stats import spearmanr
    rho = spearmanr(np.arange(20), metrics.mse_per_leadtime(mus, gts)).statistic
    print(json.dumps(dict(tag=tag, t=round(time.time()-t0), bb_final=round(float(np.mean(bl[-20:])),4),
        rho=round(float(rho),3),
        csi=dict(bb=round(rb["csi"],4), rect=round(rr["csi"],4), full=round(rf["csi"],4)),
        csi16=dict(bb=round(rb["csi16"],4), full=round(rf["csi16"],4)),
        hss=dict(bb=round(rb["hss"],4), full=round(rf["hss"],4)),
        ssim=dict(bb=round(rb["ssim"],4), full=round(rf["ssim"],4)))), flush=True)

P = data.AdvectionParams
run("A_gentle",   P(max_speed=1.0, noise=0.12, growth_decay=-0.005, diffusion=0.08, noise_corr=6.0))
run("B_modnoise", P(max_speed=0.8, noise=0.18, growth_decay=-0.01,  diffusion=0.05, noise_corr=4.0))
run("C_largecorr",P(max_speed=1.2, noise=0.10, growth_decay=0.0,    diffusion=0.10, noise_corr=8.0))
run("D_current",  P(max_speed=1.0, noise=0.25, growth_decay=-0.01,  diffusion=0.12, noise_corr=6.0))
