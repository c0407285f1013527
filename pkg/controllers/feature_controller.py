import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from controllers.registration_controller import build_component
from models.config_model import RegistrationConfig
from models.errors import ConfigurationError
from models.feature_model import ExternalFeatureSource, StaticFeatureMap, compute_static_features, pca_reduce
from models.io_model import write_static_features
from models.volume_model import BinaryMask, Volume


class FeatureController:
    """Precomputes dense feature maps and checks externally supplied ones"""

    def __init__(self, config: RegistrationConfig):
        self.config = config
        self.components = [build_component(name, config) for name in config.models]

    def compute(self, image: Volume, mask: Optional[BinaryMask] = None) -> Dict[str, StaticFeatureMap]:
        """Dense maps of every built-in extractor, PCA-reduced when the configuration asks for it"""
        maps = {}
        for component in self.components:
            extractor = component.extractor
            if isinstance(extractor, ExternalFeatureSource):
                continue
            feature_map = compute_static_features(
                extractor, image, self.config.tile_size or None, self.config.tile_overlap
            )
            if self.config.pca > 0:
                feature_map = pca_reduce(feature_map, self.config.pca, mask)
                logging.info(f"{extractor.name} reduced to {feature_map.channels} channel(s) by PCA")
            maps[extractor.name] = feature_map
        if not maps:
            raise ConfigurationError("No built-in extractor in ModelsPath; nothing to compute")
        return maps

    def save(self, maps: Dict[str, StaticFeatureMap], out_dir: Path, prefix: str = "features") -> List[Path]:
        return [write_static_features(feature_map, out_dir, f"{prefix}_{name}") for name, feature_map in maps.items()]

    def validate(self, fixed: Volume, moving: Volume) -> List[Dict[str, Any]]:
        """Load the external maps named in the configuration against both images; raises on any mismatch"""
        rows = []
        for component in self.components:
            source = component.extractor
            if not isinstance(source, ExternalFeatureSource):
                continue
            fixed_map, moving_map = source.load(fixed, moving)
            for index, layer in enumerate(source.enabled_layers()):
                rows.append(
                    {
                        "layer": layer.layer_id,
                        "fixed": source.fixed_paths[layer.layer_id],
                        "moving": source.moving_paths[layer.layer_id],
                        "channels": fixed_map.layers[index].channels,
                        "weight": layer.weight,
                        "fixed_dims": list(fixed_map.layers[index].dims),
                        "moving_dims": list(moving_map.layers[index].dims),
                    }
                )
        if not rows:
            raise ConfigurationError('Nothing to validate: ModelsPath does not include "External"')
        logging.info(f"Validated {len(rows)} external feature layer(s)")
        return rows
