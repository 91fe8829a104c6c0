__all__ = [
	"checkpoint_io",
	"grid_io",
	"timing",
]
