"""Run configuration: dataclass sections addressed by flat dotted keys.

Config files are plain text, one `section.key=value` per line (# comments);
command-line flags override file values. Every key has a default and unknown
keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .diffcore.tensor import ContractError


@dataclass
class ModelConfig:
    pos_freqs: int = 10          # frequency count for 3-d point encodings
    time_freqs: int = 4          # frequency count for temporal-vector encodings
    deform_hidden: int = 128     # hidden width of the deformation MLPs
    scene_hidden: int = 256      # hidden width of the scene MLP
    grid_res: int = 32           # weight-volume resolution (multiple of 8)
    latent_dim: int = 16         # constant random latent feeding the decoder
    decoder_channels: str = "16,8,4"
    refine_hidden: int = 16

    def decoder_plan(self):
        parts = tuple(int(x) for x in self.decoder_channels.split(","))
        if len(parts) != 3:
            raise ContractError("decoder_channels must name three channel counts")
        return parts


@dataclass
class RenderConfig:
    samples: int = 64            # stratified samples per ray
    patch: int = 32              # square patch side for ray batches
    patches_per_step: int = 4


@dataclass
class LossConfig:
    w_mse: float = 1.0
    w_perceptual: float = 1.0
    w_tcl_rend: float = 1.0
    w_can_mse: float = 1.0
    w_tcl_deform: float = 1.0
    w_ccl: float = 1.0
    w_seg: float = 1.0
    tcl_half_window: int = 2
    tcl_lambda: float = 0.5
    tcl_eps_sigma: float = 1e-6
    perceptual_plugin: str = "random-features"
    ccl_samples: int = 1024      # positional sample cap per cyclic-loss batch
    vreg_weight: float = 0.1    # temporal-vector anchor penalty

    def weights(self) -> dict:
        return {"mse": self.w_mse, "perceptual": self.w_perceptual,
                "tcl_rend": self.w_tcl_rend, "can_mse": self.w_can_mse,
                "tcl_deform": self.w_tcl_deform, "ccl": self.w_ccl,
                "seg": self.w_seg, "vreg": 1.0}


@dataclass
class TrainConfig:
    iters: int = 3000
    lr: float = 5e-4
    seed: int = 0
    unfreeze_nonrigid: int = -1   # -1 = 20% of iters
    unfreeze_seg: int = -1        # -1 = 30% of iters
    unfreeze_refine: int = -1     # -1 = 50% of iters
    checkpoint_interval: int = 1000
    eval_interval: int = 0        # 0 = only at the end
    holdout: str = ""             # comma-separated frame positions kept out of training
    sparse: float = 1.0           # dataset fraction retained before training
    enable_nonrigid: bool = True
    enable_temporal: bool = True
    enable_refine: bool = True
    ablate: str = ""              # comma list: no-pid,no-ccl,no-tcl,no-refine,no-seg
    tcl_patches: int = 1          # patches rendered for the temporal window

    def resolve_unfreeze(self):
        t_nr = self.unfreeze_nonrigid if self.unfreeze_nonrigid >= 0 \
            else int(round(0.2 * self.iters))
        t_s = self.unfreeze_seg if self.unfreeze_seg >= 0 \
            else int(round(0.3 * self.iters))
        t_rf = self.unfreeze_refine if self.unfreeze_refine >= 0 \
            else int(round(0.5 * self.iters))
        for t in (t_nr, t_s, t_rf):
            if t > self.iters:
                raise ContractError("unfreeze iteration beyond total iterations")
        return t_nr, t_s, t_rf

    def holdout_frames(self):
        if not self.holdout.strip():
            return []
        return [int(x) for x in self.holdout.split(",") if x.strip() != ""]

    def ablations(self):
        toks = {t.strip() for t in self.ablate.split(",") if t.strip()}
        known = {"no-pid", "no-ccl", "no-tcl", "no-refine", "no-seg"}
        bad = toks - known
        if bad:
            raise ContractError(f"unknown ablation flags: {sorted(bad)}")
        return toks


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_path: str = ""

    _SECTIONS = ("model", "render", "loss", "train")

    def set_key(self, key: str, value: str):
        if key == "data.path":
            self.data_path = value
            return
        if "." not in key:
            raise ContractError(f"config key {key!r} must be section.name")
        section, name = key.split(".", 1)
        if section not in self._SECTIONS:
            raise ContractError(f"unknown config section {section!r}")
        target = getattr(self, section)
        fmap = {f.name: f for f in fields(target)}
        if name not in fmap:
            raise ContractError(f"unknown config key {key!r}")
        ftype = fmap[name].type
        try:
            if ftype in ("int", int):
                parsed = int(value)
            elif ftype in ("float", float):
                parsed = float(value)
            elif ftype in ("bool", bool):
                low = str(value).strip().lower()
                if low in ("1", "true", "yes", "on"):
                    parsed = True
                elif low in ("0", "false", "no", "off"):
                    parsed = False
                else:
                    raise ValueError(value)
            else:
                parsed = str(value)
        except ValueError as e:
            raise ContractError(f"cannot parse {key}={value!r}: {e}") from None
        setattr(target, name, parsed)

    def apply_items(self, items):
        for k, v in items:
            self.set_key(k, v)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        cfg.load_file(path)
        return cfg

    def load_file(self, path):
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            self.set_key(k.strip(), v.strip())

    def describe(self) -> str:
        """Every config key with its current (default) value, for --help."""
        lines = ["config keys (file lines or --set key=value):"]
        for section in self._SECTIONS:
            target = getattr(self, section)
            for f in fields(target):
                lines.append(f"  {section}.{f.name} = {getattr(target, f.name)}")
        lines.append(f"  data.path = {self.data_path!r}")
        return "\n".join(lines)
