import sys
sys.path.insert(0, ".tuning")
from diaglib import diag
from flowcast import data

P = data.AdvectionParams
G = dict(n_cells=2, max_speed=0.6, diffusion=0.02, growth_decay=-0.02, noise=0.18,
         noise_corr=8.0, amp_range=(0.8, 1.0), sigma_range=(4.5, 7.0))
diag("G_fl500_bb600_s1", P(**G), bb_steps=600, fl_steps=500, seed=1)
diag("G_fl500_bb600_s2", P(**G), bb_steps=600, fl_steps=500, seed=2)
diag("G_fl500_bb600_s3", P(**G), bb_steps=600, fl_steps=500, seed=3)
