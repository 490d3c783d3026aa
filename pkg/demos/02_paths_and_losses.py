"""Forward paths of an untrained model and the losses they feed.

Generation draws class codes, a background code and z from their priors;
autoencoding encodes an image, mixes encoder codes with lookup-table codes,
and rebuilds it. Both end in the same composite of foreground, mask and
background.

    python3 demos/02_paths_and_losses.py
"""
import torch

from onegan import losses as L
from onegan.core import HyperParams, MixupCoeffs, sample_priors
from onegan.networks import OneGAN
from onegan.paths import autoencode_path, composite, generation_path

torch.manual_seed(0)
hp = HyperParams(N_P=3, N_C=12, H=64, channel_scale=0.25)
model = OneGAN(hp).eval()
n_params = sum(p.numel() for p in model.parameters())
print(f"generators + encoders: {n_params / 1e6:.2f}M parameters at H={hp.H}")

rng = torch.Generator().manual_seed(1)
with torch.no_grad():
    priors = sample_priors(hp, rng, 4)
    gen = generation_path(priors, model)
q = gen.quad
print("generated image", tuple(q.I.shape), "mask", tuple(q.I_m.shape))
print("composite identity error:", float((composite(q.I_fg, q.I_bg, q.I_m) - q.I).abs().max()))

# autoencode the generated images with half encoder codes, full bypass
with torch.no_grad():
    ae = autoencode_path(q.I, model, MixupCoeffs.constant(4, 0.5, 1.0), rng)
print("predicted children:", ae.lut_phi_c.tolist(), " requested:", priors.phi_c.tolist())

# translating to child 5 changes the foreground, while the background stays
# a function of the image and the mask actually used
with torch.no_grad():
    tr = autoencode_path(q.I, model, MixupCoeffs.constant(4, 0.0, 1.0), class_override=5, sample=False)
    _, bg_again = model.G_bg(bypass=model.E_bg(q.I, tr.quad.I_m))
print("background rebuilt from (I, I_m):", float((bg_again - tr.quad.I_bg).abs().max()))

# loss members on these tensors
print("mask regularisation:", float(L.mask_regularization(q.I_m)))
print("fake reconstruction L1:", float(L.reconstruction_loss("fake", q.I, ae.quad.I, q.I_bg, ae.quad.I_bg,
                                                              q.I_m, ae.quad.I_m)))
print("KL to lookup codes:", float(L.vae_kl_loss(ae.posterior, ae.v_p_lut, ae.v_c_lut)))
