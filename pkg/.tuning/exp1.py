import numpy as np, time, json
from flowcast import data, backbone, stunet, cascade, optim, metrics

def run_seed(seed):
    rng = np.random.default_rng(seed)
    params = data.AdvectionParams()
    t0 = time.time()
    train_seqs = data.synth_advection(seed*1000+1, 40, 25, 32, 32, params)
    test_seqs  = data.synth_advection(seed*1000+2, 12, 25, 32, 32, params)
    train = [s for q in train_seqs for s in data.window_samples(q)]
    test  = [s for q in test_seqs for s in data.window_samples(q)]

    bb = backbone.Backbone(backbone.BackboneConfig(), rng)
    bl = backbone.train_backbone(bb, train, steps=500, batch=8, rng=rng,
                                 spec=optim.OptimizerSpec(lr_max=3e-3, lr_min=1e-5))
    bb.freeze()
    sched = cascade.SegmentSchedule(5, 20)

    rect = stunet.STUNet(stunet.STUNetConfig(index_vocab=5), rng)
    rl = cascade.train_rectifier(rect, bb, train, steps=350, batch=8, rng=rng, schedule=sched,
                                 spec=optim.OptimizerSpec(lr_max=2e-3, lr_min=1e-5))
    gen = stunet.STUNet(stunet.STUNetConfig(), rng)
    gl = cascade.train_generator(gen, bb, train, steps=350, batch=8, rng=rng, schedule=sched,
                                 spec=optim.OptimizerSpec(lr_max=2e-3, lr_min=1e-5))

    mus, fulls, gts, pers = [], [], [], []
    for i, s in enumerate(test):
        mu = backbone.backbone_forward(bb, s.input)
        f, st, _ = cascade.generate_forecast(s.input, bb, rect, gen, sched, steps_rect=10, steps_gen=10, seed=900+i)
        mus.append(mu); fulls.append(f); gts.append(s.target)
        pers.append(backbone.persistence_forecast(s.input, 20))
    rep_mu = metrics.aggregate_report(mus, gts)
    rep_fl = metrics.aggregate_report(fulls, gts)
    mse_lead = metrics.mse_per_leadtime(mus, gts)
    from scipy.stats import spearmanr
    rho = spearmanr(np.arange(20), mse_lead).statistic
    out = dict(seed=seed,
               t=round(time.time()-t0,1),
               bb_loss=[round(float(np.mean(bl[:20])),4), round(float(np.mean(bl[-20:])),4)],
               rect_loss=[round(float(np.mean(rl[:20])),4), round(float(np.mean(rl[-20:])),4)],
               gen_loss=[round(float(np.mean(gl[:20])),4), round(float(np.mean(gl[-20:])),4)],
               mse_backbone=float(np.mean(metrics.mse_per_leadtime(mus, gts))),
               mse_persist=float(np.mean(metrics.mse_per_leadtime(pers, gts))),
               spearman=float(rho),
               csi_backbone=round(rep_mu["csi"],4), csi_full=round(rep_fl["csi"],4),
               csi16_backbone=round(rep_mu["csi16"],4), csi16_full=round(rep_fl["csi16"],4),
               hss_backbone=round(rep_mu["hss"],4), hss_full=round(rep_fl["hss"],4),
               ssim_backbone=round(rep_mu["ssim"],4), ssim_full=round(rep_fl["ssim"],4))
    print(json.dumps(out), flush=True)
    return out

for seed in (1, 2, 3):
    run_seed(seed)
