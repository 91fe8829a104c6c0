__all__ = [
	"alignment",
	"cli",
	"config",
	"errors",
	"field_extract",
	"geometry",
	"nerf_core",
	"pipeline",
	"reg_backbone",
	"reg_losses",
	"reg_transformer",
	"scene_synth",
]
