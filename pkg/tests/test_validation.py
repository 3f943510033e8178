"""
Opsense — Validation tests
Config, descriptor and element rules. Violations come back as data.
"""

import math

from opsense.models import FieldSchema, NodeConfig, ParameterSpec, PluginDescriptor, ProcessorSpec, StreamElement
from opsense.validation import (
    RegistryView,
    validate_config,
    validate_descriptor,
    validate_element,
    validate_node_config,
)

from .conftest import sensor_cfg

VIEW = RegistryView(plugins={"random_walk", "sine"}, processors={"passthrough", "rms_db"})


class TestValidateConfig:
    def test_valid_config_has_no_violations(self):
        assert validate_config(sensor_cfg(), VIEW).ok

    def test_history_size_zero_rejected(self):
        result = validate_config(sensor_cfg(history_size=0), VIEW)
        assert result.codes == ["HISTORY_SIZE_NONPOSITIVE"]

    def test_duplicate_field_names(self):
        result = validate_config(sensor_cfg(fields=("x", "x")), VIEW)
        assert "FIELD_NAME_DUPLICATE" in result.codes

    def test_unknown_plugin_and_processor_both_reported(self):
        cfg = sensor_cfg(plugin="thermo", processors=(ProcessorSpec(name="fft"),))
        result = validate_config(cfg, VIEW)
        assert result.codes == ["PLUGIN_UNKNOWN", "PROCESSOR_UNKNOWN"]
        assert result.violations[1].path == "processors[0].name"

    def test_invalid_name(self):
        assert "NAME_INVALID" in validate_config(sensor_cfg(name="9lives"), VIEW).codes

    def test_sampling_interval_floor(self):
        assert "SAMPLING_INTERVAL_TOO_SHORT" in validate_config(sensor_cfg(sampling_interval=5), VIEW).codes

    def test_empty_schema(self):
        assert "SCHEMA_EMPTY" in validate_config(sensor_cfg(fields=()), VIEW).codes

    def test_deterministic(self):
        cfg = sensor_cfg(name="bad name", history_size=-1, fields=("a", "a"))
        assert validate_config(cfg, VIEW) == validate_config(cfg, VIEW)


class TestValidateNodeConfig:
    def test_duplicate_sensor_names(self):
        cfg = NodeConfig(node_id="n1", sensors=(sensor_cfg(), sensor_cfg()))
        assert "SENSOR_NAME_DUPLICATE" in validate_node_config(cfg, VIEW).codes

    def test_sensor_violations_are_prefixed(self):
        cfg = NodeConfig(node_id="n1", sensors=(sensor_cfg(history_size=0),))
        result = validate_node_config(cfg, VIEW)
        assert result.violations[0].path == "sensors[0].history_size"

    def test_dashed_node_id_allowed(self):
        assert validate_node_config(NodeConfig(node_id="storage-bench"), VIEW).ok


class TestValidateDescriptor:
    def test_required_param_with_default(self):
        d = PluginDescriptor(
            plugin_name="p",
            fields=(FieldSchema(name="v"),),
            parameters=(ParameterSpec(name="k", required=True, default=1),),
        )
        assert validate_descriptor(d).codes == ["REQUIRED_PARAM_HAS_DEFAULT"]

    def test_no_fields(self):
        assert "FIELDS_EMPTY" in validate_descriptor(PluginDescriptor(plugin_name="p", fields=())).codes

    def test_duplicate_params(self):
        d = PluginDescriptor(
            plugin_name="p",
            fields=(FieldSchema(name="v"),),
            parameters=(ParameterSpec(name="k"), ParameterSpec(name="k")),
        )
        assert "PARAM_DUPLICATE" in validate_descriptor(d).codes


class TestValidateElement:
    SCHEMA = (FieldSchema(name="level"),)

    def _element(self, *values):
        return StreamElement(sensor="s", seq=0, timestamp=1, values=values)

    def test_ok(self):
        assert validate_element(self._element(1.5), self.SCHEMA).ok

    def test_arity_mismatch(self):
        assert validate_element(self._element(1.0, 2.0), self.SCHEMA).codes == ["ARITY_MISMATCH"]

    def test_nan_and_inf_rejected(self):
        assert validate_element(self._element(math.nan), self.SCHEMA).codes == ["NON_FINITE_VALUE"]
        assert validate_element(self._element(math.inf), self.SCHEMA).codes == ["NON_FINITE_VALUE"]

    def test_text_in_numeric_field(self):
        assert validate_element(self._element("loud"), self.SCHEMA).codes == ["KIND_MISMATCH"]

    def test_text_field_accepts_text(self):
        schema = (FieldSchema(name="label", kind="text"),)
        assert validate_element(self._element("loud"), schema).ok
