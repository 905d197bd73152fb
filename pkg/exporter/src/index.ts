export { Tensor, numel, tensorFrom, zeros } from "./tensor";
export { conv3x3, dense, flatten, matmul, maxPool2, relu } from "./nn";
export {
  LayerDef,
  MODELS,
  ModelSpec,
  RecordedActivation,
  RecordedLayer,
  WeightMap,
  buildWeights,
  enumerateLayers,
  forwardCollect,
  getModel,
  loadWeightsFile,
  pooledDimension,
} from "./model";
export { bilinearResize, centerCrop, decodePng, preprocess } from "./image";
export { encodeFnea, readFnea, writeFnea } from "./fnea";
export { ExportOptions, ExportResult, exportDirectory, listImages } from "./export";
