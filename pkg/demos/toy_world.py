"""Render one cross-scene sample and score identities with the oracle embedder."""
import numpy as np

from tavr import evalkit as ek
from tavr import toyworld as tw

s = tw.make_sample(0, "cross_scene", seed=3)
print("target", s.target.frames.shape, "reference", s.reference.frames.shape, "ref_len", s.ref_len)

target = ek.embed_video(s.target.frames, s.target.boxes)
reference = ek.embed_video(s.reference.frames, s.reference.boxes)
other = tw.render_video(tw.mismatched_identity(s.identity), s.target_scene, s.drv_audio, len(s.target),
                        s.seeds["motion_t"])
print("same identity, other scene:", round(ek.chamfer_similarity(target, reference), 3))
print("different identity, same scene:", round(ek.chamfer_similarity(target, ek.embed_video(other.frames, other.boxes)), 3))
print("mouth/audio correlation of the ground truth:",
      round(ek.mouth_audio_corr(s.target.frames, s.target.boxes, s.drv_audio.envelope), 3))

codec = tw.ToyCodec()
z = codec.encode(s.target.frames)
print("latent", z.shape, "round-trip PSNR", round(tw.psnr(s.target.frames, np.clip(codec.decode(z), 0, 1)), 2), "dB")
