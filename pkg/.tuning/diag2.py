import sys
sys.path.insert(0, ".tuning")
from diaglib import diag
from flowcast import data

P = data.AdvectionParams
diag("G_bigcell", P(n_cells=2, max_speed=0.6, diffusion=0.02, growth_decay=-0.02, noise=0.18,
                    noise_corr=8.0, amp_range=(0.8, 1.0), sigma_range=(4.5, 7.0)), fl_steps=700)
diag("H_bigcell2", P(n_cells=2, max_speed=0.6, diffusion=0.02, growth_decay=-0.03, noise=0.15,
                     noise_corr=10.0, amp_range=(0.85, 1.0), sigma_range=(5.0, 7.5)), fl_steps=700)
